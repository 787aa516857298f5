//! Molecular graphs, conformations and the JSONL dataset format.
//!
//! A [`MolecularGraph`] stores atoms and typed, canonically ordered edges
//! (`u < v`, sorted by `(u, v)`). Files only ever contain real bonds; the
//! auxiliary 2-hop and 3-hop edges used by the distance models are derived
//! by [`expand_graph`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Element vocabulary. The discriminant is the embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    H = 0,
    B,
    C,
    N,
    O,
    F,
    Si,
    P,
    S,
    Cl,
    Br,
    I,
}

impl Element {
    pub const COUNT: usize = 12;

    pub const ALL: [Element; Element::COUNT] = [
        Element::H,
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::Si,
        Element::P,
        Element::S,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::Si => "Si",
            Element::P => "P",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn is_heavy(self) -> bool {
        self != Element::H
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl serde::Serialize for Element {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> serde::Deserialize<'de> for Element {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Element::ALL
            .iter()
            .copied()
            .find(|e| e.symbol() == s)
            .ok_or_else(|| Error::invalid(format!("unknown element symbol `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondType {
    Single = 0,
    Double,
    Triple,
    Aromatic,
    Virtual2Hop,
    Virtual3Hop,
}

impl BondType {
    pub const COUNT: usize = 6;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn is_virtual(self) -> bool {
        matches!(self, BondType::Virtual2Hop | BondType::Virtual3Hop)
    }

    pub fn name(self) -> &'static str {
        match self {
            BondType::Single => "single",
            BondType::Double => "double",
            BondType::Triple => "triple",
            BondType::Aromatic => "aromatic",
            BondType::Virtual2Hop => "virtual_2hop",
            BondType::Virtual3Hop => "virtual_3hop",
        }
    }

    /// Parses a bond label as it may appear in a dataset file. Virtual
    /// labels are rejected: those edges are always derived.
    pub fn parse_real(s: &str) -> Option<Self> {
        match s {
            "single" => Some(BondType::Single),
            "double" => Some(BondType::Double),
            "triple" => Some(BondType::Triple),
            "aromatic" => Some(BondType::Aromatic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub bond: BondType,
}

/// Atoms plus canonically ordered typed edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolecularGraph {
    atoms: Vec<Element>,
    edges: Vec<Edge>,
}

impl MolecularGraph {
    /// Builds and validates a graph. Edge endpoints are reoriented to
    /// `u < v` and edges sorted by `(u, v)`.
    pub fn new(atoms: Vec<Element>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Graph("graph has no atoms".into()));
        }
        let n = atoms.len();
        let mut canon = Vec::new();
        for e in edges {
            if e.u >= n || e.v >= n {
                return Err(Error::Graph(format!(
                    "edge ({}, {}) out of range for {n} atoms",
                    e.u, e.v
                )));
            }
            if e.u == e.v {
                return Err(Error::Graph(format!("self-loop on atom {}", e.u)));
            }
            let (u, v) = if e.u < e.v { (e.u, e.v) } else { (e.v, e.u) };
            canon.push(Edge { u, v, bond: e.bond });
        }
        canon.sort_by_key(|e| (e.u, e.v));
        if let Some(w) = canon.windows(2).find(|w| (w[0].u, w[0].v) == (w[1].u, w[1].v)) {
            return Err(Error::Graph(format!(
                "duplicate edge ({}, {})",
                w[0].u, w[0].v
            )));
        }
        let graph = MolecularGraph { atoms, edges: canon };
        if !graph.real_subgraph_connected() {
            return Err(Error::Graph("real-bond subgraph is disconnected".into()));
        }
        Ok(graph)
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Element] {
        &self.atoms
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn real_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| !e.bond.is_virtual())
    }

    pub fn is_expanded(&self) -> bool {
        self.edges.iter().any(|e| e.bond.is_virtual()) || *self == expand_unchecked(self)
    }

    /// `true` for every non-hydrogen atom. Molecules without any heavy atom
    /// fall back to an all-true mask so that RMSD stays defined.
    pub fn heavy_atom_mask(&self) -> Vec<bool> {
        let mask: Vec<bool> = self.atoms.iter().map(|a| a.is_heavy()).collect();
        if mask.iter().any(|&m| m) {
            mask
        } else {
            vec![true; mask.len()]
        }
    }

    fn real_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_atoms()];
        for e in self.real_edges() {
            adj[e.u].push(e.v);
            adj[e.v].push(e.u);
        }
        adj
    }

    fn real_subgraph_connected(&self) -> bool {
        let adj = self.real_adjacency();
        bfs(&adj, 0).iter().all(Option::is_some)
    }
}

fn bfs(adj: &[Vec<usize>], source: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; adj.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(x) = queue.pop_front() {
        let dx = dist[x].unwrap_or(0);
        for &y in &adj[x] {
            if dist[y].is_none() {
                dist[y] = Some(dx + 1);
                queue.push_back(y);
            }
        }
    }
    dist
}

/// Symmetric all-pairs hop counts over real bonds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopTable {
    n: usize,
    hops: Vec<Option<u32>>,
}

impl HopTable {
    pub fn num_atoms(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> Option<u32> {
        self.hops[a * self.n + b]
    }
}

pub fn shortest_hop_distances(g: &MolecularGraph) -> HopTable {
    let adj = g.real_adjacency();
    let n = g.num_atoms();
    let mut hops = Vec::with_capacity(n * n);
    for a in 0..n {
        hops.extend(bfs(&adj, a));
    }
    HopTable { n, hops }
}

fn expand_unchecked(g: &MolecularGraph) -> MolecularGraph {
    let hops = shortest_hop_distances(g);
    let n = g.num_atoms();
    let mut edges: Vec<Edge> = g.real_edges().copied().collect();
    for u in 0..n {
        for v in (u + 1)..n {
            let bond = match hops.get(u, v) {
                Some(2) => BondType::Virtual2Hop,
                Some(3) => BondType::Virtual3Hop,
                _ => continue,
            };
            edges.push(Edge { u, v, bond });
        }
    }
    edges.sort_by_key(|e| (e.u, e.v));
    MolecularGraph {
        atoms: g.atoms.clone(),
        edges,
    }
}

/// Adds virtual edges between atoms exactly two or three real-bond hops
/// apart. Existing virtual edges are discarded and re-derived, so the
/// operation is idempotent.
pub fn expand_graph(g: &MolecularGraph) -> Result<MolecularGraph> {
    if !g.real_subgraph_connected() {
        return Err(Error::Graph("real-bond subgraph is disconnected".into()));
    }
    Ok(expand_unchecked(g))
}

/// Cartesian coordinates, one row per atom, in Å.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformation {
    pub coords: Vec<[f64; 3]>,
}

impl Conformation {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("conformation coordinate".into()));
        }
        Ok(Conformation { coords })
    }

    pub fn zeros(n: usize) -> Self {
        Conformation {
            coords: vec![[0.0; 3]; n],
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Conformation {
            coords: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|x| x.is_finite())
    }
}

/// One dataset row: a graph with its reference conformations.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeRecord {
    pub id: String,
    pub graph: MolecularGraph,
    pub conformations: Vec<Conformation>,
}

impl MoleculeRecord {
    pub fn new(id: String, graph: MolecularGraph, conformations: Vec<Conformation>) -> Result<Self> {
        for (k, c) in conformations.iter().enumerate() {
            if c.num_atoms() != graph.num_atoms() {
                return Err(Error::Graph(format!(
                    "molecule `{id}` conformation {k} has {} rows, expected {}",
                    c.num_atoms(),
                    graph.num_atoms()
                )));
            }
        }
        Ok(MoleculeRecord {
            id,
            graph,
            conformations,
        })
    }

    pub fn to_json(&self) -> Value {
        let atoms: Vec<&str> = self.graph.atoms().iter().map(|a| a.symbol()).collect();
        let bonds: Vec<Value> = self
            .graph
            .real_edges()
            .map(|e| json!([e.u, e.v, e.bond.name()]))
            .collect();
        let confs: Vec<&Vec<[f64; 3]>> = self.conformations.iter().map(|c| &c.coords).collect();
        json!({
            "id": self.id,
            "atoms": atoms,
            "bonds": bonds,
            "conformations": confs,
        })
    }
}

struct LineCtx<'a> {
    path: &'a str,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line,
            field: field.into(),
            message: message.into(),
        }
    }
}

fn parse_index(ctx: &LineCtx<'_>, v: &Value, field: String) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| ctx.err(field, "expected a non-negative integer"))
}

fn parse_record_value(ctx: &LineCtx<'_>, value: &Value) -> Result<MoleculeRecord> {
    let obj = value
        .as_object()
        .ok_or_else(|| ctx.err("<record>", "expected a JSON object"))?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| ctx.err("id", "missing or not a string"))?
        .to_string();

    let atoms_v = obj
        .get("atoms")
        .and_then(Value::as_array)
        .ok_or_else(|| ctx.err("atoms", "missing or not an array"))?;
    let mut atoms = Vec::with_capacity(atoms_v.len());
    for (i, a) in atoms_v.iter().enumerate() {
        let sym = a
            .as_str()
            .ok_or_else(|| ctx.err(format!("atoms[{i}]"), "expected an element symbol"))?;
        let el = sym
            .parse::<Element>()
            .map_err(|e| ctx.err(format!("atoms[{i}]"), e.to_string()))?;
        atoms.push(el);
    }
    let n = atoms.len();

    let bonds_v = obj
        .get("bonds")
        .and_then(Value::as_array)
        .ok_or_else(|| ctx.err("bonds", "missing or not an array"))?;
    let mut edges = Vec::with_capacity(bonds_v.len());
    for (i, b) in bonds_v.iter().enumerate() {
        let triple = b
            .as_array()
            .filter(|t| t.len() == 3)
            .ok_or_else(|| ctx.err(format!("bonds[{i}]"), "expected [u, v, type]"))?;
        let u = parse_index(ctx, &triple[0], format!("bonds[{i}][0]"))?;
        let v = parse_index(ctx, &triple[1], format!("bonds[{i}][1]"))?;
        for (k, idx) in [(0, u), (1, v)] {
            if idx >= n {
                return Err(ctx.err(
                    format!("bonds[{i}][{k}]"),
                    format!("atom index {idx} out of range for {n} atoms"),
                ));
            }
        }
        let bond = triple[2]
            .as_str()
            .and_then(BondType::parse_real)
            .ok_or_else(|| {
                ctx.err(
                    format!("bonds[{i}][2]"),
                    "expected one of single, double, triple, aromatic",
                )
            })?;
        edges.push(Edge { u, v, bond });
    }
    let graph =
        MolecularGraph::new(atoms, edges).map_err(|e| ctx.err("bonds", e.to_string()))?;

    let confs_v = obj
        .get("conformations")
        .and_then(Value::as_array)
        .ok_or_else(|| ctx.err("conformations", "missing or not an array"))?;
    let mut conformations = Vec::with_capacity(confs_v.len());
    for (k, c) in confs_v.iter().enumerate() {
        let rows = c
            .as_array()
            .ok_or_else(|| ctx.err(format!("conformations[{k}]"), "expected an array"))?;
        if rows.len() != n {
            return Err(ctx.err(
                format!("conformations[{k}]"),
                format!("has {} rows, expected {n}", rows.len()),
            ));
        }
        let mut coords = Vec::with_capacity(n);
        for (r, row) in rows.iter().enumerate() {
            let field = || format!("conformations[{k}][{r}]");
            let xyz = row
                .as_array()
                .filter(|t| t.len() == 3)
                .ok_or_else(|| ctx.err(field(), "expected [x, y, z]"))?;
            let mut p = [0.0; 3];
            for (slot, x) in p.iter_mut().zip(xyz) {
                *slot = x
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| ctx.err(field(), "expected finite numbers"))?;
            }
            coords.push(p);
        }
        conformations.push(Conformation { coords });
    }
    MoleculeRecord::new(id, graph, conformations).map_err(|e| ctx.err("conformations", e.to_string()))
}

/// Parses one JSONL line. `line` is 1-based and only used for messages.
pub fn parse_record_line(text: &str, path: &str, line: usize) -> Result<MoleculeRecord> {
    let ctx = LineCtx { path, line };
    let value: Value =
        serde_json::from_str(text).map_err(|e| ctx.err("<json>", e.to_string()))?;
    parse_record_value(&ctx, &value)
}

/// Reads a JSONL dataset. Blank lines are skipped.
pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<MoleculeRecord>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record_line(&line, &shown, i + 1)?);
    }
    Ok(records)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[MoleculeRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &r.to_json())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Disjoint union of several graphs, used to evaluate many molecules (or
/// many samples of one molecule) in a single network pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub(crate) atom_codes: Vec<usize>,
    pub(crate) edge_u: Vec<usize>,
    pub(crate) edge_v: Vec<usize>,
    pub(crate) bond_codes: Vec<usize>,
    pub(crate) edge_component: Vec<usize>,
    pub(crate) edge_local: Vec<usize>,
    pub(crate) atom_component: Vec<usize>,
    pub(crate) component_edges: Vec<usize>,
    pub(crate) component_atoms: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolecularGraph]) -> Self {
        let mut b = GraphBatch {
            atom_codes: Vec::new(),
            edge_u: Vec::new(),
            edge_v: Vec::new(),
            bond_codes: Vec::new(),
            edge_component: Vec::new(),
            edge_local: Vec::new(),
            atom_component: Vec::new(),
            component_edges: Vec::new(),
            component_atoms: Vec::new(),
        };
        for (c, g) in graphs.iter().enumerate() {
            let offset = b.atom_codes.len();
            b.atom_codes.extend(g.atoms().iter().map(|a| a.code()));
            b.atom_component.extend(std::iter::repeat_n(c, g.num_atoms()));
            for (k, e) in g.edges().iter().enumerate() {
                b.edge_u.push(offset + e.u);
                b.edge_v.push(offset + e.v);
                b.bond_codes.push(e.bond.code());
                b.edge_component.push(c);
                b.edge_local.push(k);
            }
            b.component_edges.push(g.num_edges());
            b.component_atoms.push(g.num_atoms());
        }
        b
    }

    pub fn replicate(g: &MolecularGraph, copies: usize) -> Self {
        let graphs = vec![g; copies];
        GraphBatch::new(&graphs)
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_codes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_u.len()
    }

    pub fn num_components(&self) -> usize {
        self.component_edges.len()
    }

    pub fn max_component_edges(&self) -> usize {
        self.component_edges.iter().copied().max().unwrap_or(0)
    }

    pub fn component_edge_counts(&self) -> &[usize] {
        &self.component_edges
    }

    pub fn component_atom_counts(&self) -> &[usize] {
        &self.component_atoms
    }

    /// Splits a per-edge vector of the batch back into per-component pieces.
    pub fn split_edges<'a>(&self, values: &'a [f64]) -> Vec<&'a [f64]> {
        let mut out = Vec::with_capacity(self.num_components());
        let mut start = 0;
        for &m in &self.component_edges {
            out.push(&values[start..start + m]);
            start += m;
        }
        out
    }
}

/// Counts element symbols, mostly for diagnostics.
pub fn composition(g: &MolecularGraph) -> BTreeMap<Element, usize> {
    let mut counts = BTreeMap::new();
    for &a in g.atoms() {
        *counts.entry(a).or_insert(0) += 1;
    }
    counts
}

//! Molecular conformation generation in distance space.
//!
//! The pipeline has two stages. A conditional continuous normalizing flow
//! over inter-atomic distances ([`flow`]) draws a distance vector for a
//! molecular graph, and [`geometry::assemble`] turns it into coordinates.
//! An energy network ([`etm`]) trained by noise contrastive estimation then
//! tilts that density, and [`sampler`] refines the coordinates with Langevin
//! dynamics. [`metrics`] holds the evaluation suite.

pub mod diffcore;
pub mod dynamics;
pub mod error;
pub mod etm;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod molgraph;
pub mod rng;
pub mod sampler;
pub mod synth;

pub use error::{Error, Result};
pub use molgraph::{
    expand_graph, parse_dataset, shortest_hop_distances, BondType, Conformation, Edge, Element,
    MolecularGraph, MoleculeRecord,
};

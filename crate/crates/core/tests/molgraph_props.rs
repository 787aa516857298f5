use confgen::molgraph::{parse_dataset, write_dataset, GraphBatch};
use confgen::synth::{synthesize, Family, ToySpec};
use confgen::{expand_graph, shortest_hop_distances, BondType, Conformation, Edge, Element, MolecularGraph, MoleculeRecord};
use proptest::prelude::*;

const REAL: [BondType; 4] = [BondType::Single, BondType::Double, BondType::Triple, BondType::Aromatic];

/// A random spanning tree plus a few extra real bonds.
fn graph_strategy() -> impl Strategy<Value = MolecularGraph> {
    (2usize..10)
        .prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(any::<prop::sample::Index>(), n - 1),
                proptest::collection::vec((0..n, 0..n), 0..4),
                proptest::collection::vec(0usize..Element::COUNT, n),
                proptest::collection::vec(0usize..4, n + 4),
            )
        })
        .prop_map(|(n, parents, extra, elems, bonds)| {
            let mut pairs: Vec<(usize, usize)> = (1..n).map(|v| (parents[v - 1].index(v), v)).collect();
            for (a, b) in extra {
                let (u, v) = (a.min(b), a.max(b));
                if u != v && !pairs.contains(&(u, v)) {
                    pairs.push((u, v));
                }
            }
            let edges = pairs.iter().enumerate().map(|(i, &(u, v))| Edge { u, v, bond: REAL[bonds[i % bonds.len()]] });
            let atoms = elems.iter().map(|&e| Element::ALL[e]).collect();
            MolecularGraph::new(atoms, edges).unwrap()
        })
}

/// All-pairs hop counts by Floyd–Warshall over real bonds.
fn floyd(g: &MolecularGraph) -> Vec<Vec<u32>> {
    let n = g.num_atoms();
    let inf = u32::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for e in g.real_edges() {
        d[e.u][e.v] = 1;
        d[e.v][e.u] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

proptest! {
    #[test]
    fn expansion_matches_floyd_warshall(g in graph_strategy()) {
        let x = expand_graph(&g).unwrap();
        let hops = floyd(&g);
        let n = g.num_atoms();
        let table = shortest_hop_distances(&g);
        for u in 0..n {
            for v in 0..n {
                prop_assert_eq!(table.get(u, v), Some(hops[u][v]));
            }
        }
        let mut expected: Vec<Edge> = g.real_edges().copied().collect();
        for u in 0..n {
            for v in u + 1..n {
                match hops[u][v] {
                    2 => expected.push(Edge { u, v, bond: BondType::Virtual2Hop }),
                    3 => expected.push(Edge { u, v, bond: BondType::Virtual3Hop }),
                    _ => {}
                }
            }
        }
        expected.sort_by_key(|e| (e.u, e.v));
        prop_assert_eq!(x.edges(), expected.as_slice());
        prop_assert!(x.edges().windows(2).all(|w| (w[0].u, w[0].v) < (w[1].u, w[1].v)));
        prop_assert!(x.edges().iter().all(|e| e.u < e.v));
        prop_assert_eq!(expand_graph(&x).unwrap(), x);
    }

    #[test]
    fn records_round_trip_through_jsonl(g in graph_strategy(), k in 0usize..3, seed in any::<u64>()) {
        let mut r = confgen::rng::stream(seed);
        let confs: Vec<Conformation> = (0..k)
            .map(|_| Conformation::from_flat(&confgen::rng::normals(&mut r, 3 * g.num_atoms())))
            .collect();
        let rec = MoleculeRecord::new("m".into(), g, confs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, std::slice::from_ref(&rec)).unwrap();
        let back = parse_dataset(&path).unwrap();
        prop_assert_eq!(back, vec![rec]);
    }

    #[test]
    fn batch_offsets_are_consistent(gs in proptest::collection::vec(graph_strategy(), 1..4)) {
        let xs: Vec<MolecularGraph> = gs.iter().map(|g| expand_graph(g).unwrap()).collect();
        let refs: Vec<&MolecularGraph> = xs.iter().collect();
        let b = GraphBatch::new(&refs);
        prop_assert_eq!(b.num_atoms(), xs.iter().map(|g| g.num_atoms()).sum::<usize>());
        prop_assert_eq!(b.num_edges(), xs.iter().map(|g| g.num_edges()).sum::<usize>());
        prop_assert_eq!(b.component_edge_counts().to_vec(), xs.iter().map(|g| g.num_edges()).collect::<Vec<_>>());
    }
}

#[test]
fn five_atom_chain_gains_five_virtual_edges() {
    let edges = (0..4).map(|i| Edge { u: i, v: i + 1, bond: BondType::Single });
    let g = MolecularGraph::new(vec![Element::C; 5], edges).unwrap();
    let x = expand_graph(&g).unwrap();
    assert_eq!(x.num_edges(), 9);
    let count = |b| x.edges().iter().filter(|e| e.bond == b).count();
    assert_eq!(count(BondType::Virtual2Hop), 3);
    assert_eq!(count(BondType::Virtual3Hop), 2);
}

#[test]
fn invalid_graphs_are_rejected() {
    let e = |u, v| Edge { u, v, bond: BondType::Single };
    assert!(MolecularGraph::new(vec![Element::C; 3], [e(0, 1)]).is_err());
    assert!(MolecularGraph::new(vec![Element::C; 2], [e(0, 1), e(1, 0)]).is_err());
    assert!(MolecularGraph::new(vec![Element::C; 2], [e(0, 2)]).is_err());
    assert!(MolecularGraph::new(vec![Element::C; 2], [e(1, 1)]).is_err());
    let g = MolecularGraph::new(vec![Element::C; 3], [e(2, 1), e(1, 0)]).unwrap();
    assert_eq!(g.edges()[0], e(0, 1));
}

#[test]
fn malformed_lines_name_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = r#"{"id":"a","atoms":["C","O"],"bonds":[[0,1,"single"]],"conformations":[]}"#;
    let bad = r#"{"id":"b","atoms":["C","O"],"bonds":[[0,5,"single"]],"conformations":[]}"#;
    std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
    let msg = parse_dataset(&path).unwrap_err().to_string();
    assert!(msg.contains(":2:"), "{msg}");
    let unknown = r#"{"id":"c","atoms":["C","Xx"],"bonds":[[0,1,"single"]],"conformations":[]}"#;
    std::fs::write(&path, format!("{unknown}\n")).unwrap();
    let msg = parse_dataset(&path).unwrap_err().to_string();
    assert!(msg.contains(":1:") && msg.contains("atoms"), "{msg}");
}

#[test]
fn thousand_random_toy_specs_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.jsonl");
    let mut r = confgen::rng::stream(2024);
    use rand::Rng;
    for i in 0..1000u64 {
        let family = if r.random_bool(0.5) { Family::Chain } else { Family::RingTail };
        let lo = r.random_range(if family == Family::Chain { 3 } else { 4 }..=12);
        let spec = ToySpec {
            family,
            num_molecules: r.random_range(1..=3),
            atoms_min: lo,
            atoms_max: r.random_range(lo..=12),
            mode_separation: r.random_range(0.05..1.5),
            conformers_per_molecule: r.random_range(1..=4),
            noise: r.random_range(0.0..0.1),
            hetero_fraction: r.random_range(0.0..1.0),
            seed: i,
        };
        let recs = synthesize(&spec).unwrap();
        write_dataset(&path, &recs).unwrap();
        assert_eq!(parse_dataset(&path).unwrap(), recs, "spec {spec:?}");
    }
}
